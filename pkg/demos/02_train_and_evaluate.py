"""Train the main condition and look at every evaluation metric.

Trains D1_Z2_Y (adversarial, 1 latent + 2 conditional dims) on a
desk-scale grid capture, then runs parameter estimation on fresh audio
and latent-distribution statistics.  Takes a minute or two.
"""

import numpy as np

from synthclone import dataset as dsmod
from synthclone import experiments as ex
from synthclone import neural as nn

print("building bowed1 (grid_step=4)...")
ds = dsmod.build_bowed1(grid_step=4)
print(f"{ds.count} records\n")

cond = ex.parse_label("D1_Z2_Y")
cfg = ex.TrainConfig(seed=7)
print(f"training {cond.label}: {cfg.n_batches} batches, "
      f"batch {cfg.batch_size}, lr {cfg.lr}, lambda {cfg.lam}")
result = ex.train(cond, ds, cfg)
h = result.history
print(f"E_loss {h.e_loss[0]:.3f} -> {np.mean(h.e_loss[-50:]):.3f}")
print(f"discriminator probs at the end: real {np.mean(h.p_real[-200:]):.2f}, "
      f"fake {np.mean(h.p_fake[-200:]):.2f} (0.5 = non-collapsed)\n")

mse = ex.eval_reconstruction(result.encoder, result.decoder, ds)
print(f"reconstruction MSE (normalized units): {mse:.4f}")

print("estimating parameters along a fresh smooth trajectory...")
traj = ex.make_eval_trajectory()
rms, skipped = ex.eval_param_estimation(result.encoder, ds, traj)
print(f"trajectory RMS error: {rms:.1f} (0-128 units), "
      f"{skipped:.1%} unstable windows skipped\n")

ls = ex.latent_stats(result.encoder, ds, cond.n_latent, seed=0)
print(f"latent KS vs U(-1,1): {ls.ks[0]:.3f}")

nn.save_checkpoint("/tmp/demo_model.ckpt",
                   {"encoder": result.encoder, "decoder": result.decoder},
                   ds.stats, meta={"n_latent": 1, "condition": cond.label},
                   reference=ds.reference)
print("checkpoint saved to /tmp/demo_model.ckpt "
      "(try demos/03_realtime_synth.py next)")
