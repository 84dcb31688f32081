import time, warnings, numpy as np, torch
warnings.filterwarnings("ignore")
from genprop import synthworld, backbone, trainer
from genprop.backbone import add_noise, pixels_to_latent

t0 = time.time()
cfg = backbone.ModelConfig(height=16, width=16, frames=8, patch=4, hidden=96, blocks=4, heads=4,
                           sce_blocks=2, diffusion_steps=64, sample_steps=16)
scenes = [synthworld.render_scene(synthworld.sample_scene_spec(s, canvas=(16,16), frames=8)) for s in range(300)]

tc = trainer.TrainConfig(total_steps=4000, warmup_steps=100, batch=8, phase="backbone", seed=1,
                         lr_base=3e-4, ema_decay=0.995)
state = trainer.init_backbone_state(cfg, tc)
src = trainer.PretrainDataSource(scenes, 1)

def probe(model, label):
    model.eval()
    test = [synthworld.render_scene(synthworld.sample_scene_spec(s, canvas=(16,16), frames=8)) for s in range(900, 916)]
    x0 = torch.stack([pixels_to_latent(s.video.data, 1) for s in test])
    cond = torch.stack([pixels_to_latent(s.video.data[0], 1) for s in test])
    g = torch.Generator().manual_seed(0)
    for t_val in (8, 24, 56):
        eps = torch.randn(x0.shape, generator=g)
        x_t = add_noise(x0, eps, t_val, state.sched)
        with torch.no_grad():
            out = model.denoise(x_t, t_val, cond, 3, 3)
        err = (out.eps - eps).square().mean(dim=(0,2,3,4))
        print(label, f"t={t_val}: f0={float(err[0]):.4f} mean1_7={float(err[1:].mean()):.4f}")
    model.train()

state, traces = trainer.train_loop(state, src)
print("pretrain2 done", round(time.time()-t0,1), "loss head/tail",
      round(np.mean([b.total for b in traces[:50]]),4), round(np.mean([b.total for b in traces[-50:]]),4))
probe(state.model, "raw")
probe(trainer.ema_model(state), "ema")
trainer.save_checkpoint(state, "/tmp/derisk/backbone2")
print("total", round(time.time()-t0,1))
