import sys, time, warnings, numpy as np, torch
warnings.filterwarnings("ignore")
from genprop import synthworld, backbone, trainer, evaluate

t_start = time.time()
CANVAS = (16, 16)
cfg = backbone.ModelConfig(height=16, width=16, frames=8, patch=4, hidden=96, blocks=4, heads=4,
                           sce_blocks=2, diffusion_steps=64, sample_steps=16)

def scenes_for(n):
    return [synthworld.render_scene(synthworld.sample_scene_spec(s, canvas=CANVAS, frames=8))
            for s in range(n)]

if "train" in sys.argv:
    scenes = scenes_for(300)
    print("scenes", round(time.time()-t_start,1))
    tc_b = trainer.TrainConfig(total_steps=1200, warmup_steps=50, batch=8, phase="backbone", seed=1)
    state_b = trainer.init_backbone_state(cfg, tc_b)
    src_b = trainer.PretrainDataSource(scenes, 1)
    state_b, traces = trainer.train_loop(state_b, src_b)
    print("pretrain done", round(time.time()-t_start,1), "loss head/tail",
          round(np.mean([b.total for b in traces[:50]]),4),
          round(np.mean([b.total for b in traces[-50:]]),4))
    trainer.save_checkpoint(state_b, "/tmp/derisk/backbone")

    backbone_model = trainer.ema_model(state_b)
    tc_p = trainer.TrainConfig(total_steps=1500, warmup_steps=50, batch=8, phase="prop", seed=2)
    state_p = trainer.init_prop_state(backbone_model, tc_p)
    src_p = trainer.SceneDataSource(scenes, 2)
    state_p, traces = trainer.train_loop(state_p, src_p)
    print("prop done", round(time.time()-t_start,1), "loss head/tail",
          round(np.mean([b.total for b in traces[:50]]),4),
          round(np.mean([b.total for b in traces[-50:]]),4))
    trainer.save_checkpoint(state_p, "/tmp/derisk/prop")

if "eval" in sys.argv:
    state_p = trainer.load_checkpoint("/tmp/derisk/prop")
    model = trainer.ema_model(state_p)
    model.eval()
    n = int(sys.argv[sys.argv.index("eval")+1]) if len(sys.argv) > sys.argv.index("eval")+1 else 12
    seeds = range(5000, 5400)
    for kind in ("removal", "tracking", "reconstruction"):
        items = evaluate.build_eval_items(kind, seeds, canvas=CANVAS, frames=8, count=n)
        rep = evaluate.evaluate_items(model, items, steps=16)
        print(kind, {k: round(v,4) for k,v in rep["aggregates"].get(kind, {}).items()},
              "elapsed", round(time.time()-t_start,1))
print("total", round(time.time()-t_start,1))
