import sys, time, warnings, numpy as np, torch
warnings.filterwarnings("ignore")
from genprop import synthworld, backbone, trainer, evaluate

t0 = time.time()
scenes = [synthworld.render_scene(synthworld.sample_scene_spec(s, canvas=(16,16), frames=8)) for s in range(300)]
state_b = trainer.load_checkpoint("/tmp/derisk/backbone2")
bb = trainer.ema_model(state_b)

lr = float(sys.argv[1])
steps = int(sys.argv[2])
tc = trainer.TrainConfig(total_steps=steps, warmup_steps=50, batch=8, phase="prop", seed=2,
                         lr_base=lr, ema_decay=0.995)
state = trainer.init_prop_state(bb, tc)
src = trainer.SceneDataSource(scenes, 2)
state, traces = trainer.train_loop(state, src)
print(f"lr={lr} steps={steps}: total first/last 50:",
      round(np.mean([b.total for b in traces[:50]]),4), round(np.mean([b.total for b in traces[-50:]]),4),
      "| non_mask last50:", round(np.mean([b.non_mask for b in traces[-50:]]),4),
      "| mpd last50:", round(np.mean([b.mpd for b in traces[-50:]]),4),
      "| elapsed", round(time.time()-t0,1))
model = trainer.ema_model(state); model.eval()

for kind in ("reconstruction", "removal", "tracking"):
    items = evaluate.build_eval_items(kind, range(5000, 5400), canvas=(16,16), frames=8, count=6)
    rep = evaluate.evaluate_items(model, items, steps=16)
    print(kind, {k: round(v,4) for k,v in rep["aggregates"].get(kind, {}).items()})
# injection contribution probe
items = evaluate.build_eval_items("reconstruction", range(5000, 5100), canvas=(16,16), frames=8, count=2)
for w in (0.0, 1.0):
    vals = [evaluate.evaluate_item(model, it, injection_weight=w, steps=16)["psnr"] for it in items]
    print("recon @ weight", w, [round(v,1) for v in vals])
trainer.save_checkpoint(state, f"/tmp/derisk/prop_lr{lr}")
print("total", round(time.time()-t0,1))
