"""Drive the overlap-add synthesizer from a trained decoder.

Needs the checkpoint written by demos/02_train_and_evaluate.py.  Renders
a parameter sweep offline, checks the real-time factor, and writes a WAV
you can listen to.
"""

import sys
import time

import numpy as np

from synthclone import dataset as dsmod
from synthclone import synth as symod

try:
    state = symod.make_synth_from_checkpoint("/tmp/demo_model.ckpt")
except FileNotFoundError:
    sys.exit("run demos/02_train_and_evaluate.py first")

print(f"decoder: {state.n_latent} latent + {state.n_cond} conditional dims, "
      f"cycle {state.cycle_len}, hop {state.hop}")

# sweep pressure up, then position, then wiggle the latent knob
def scaled(v):
    return v / 64.0 - 1.0

hops = []
for i in range(300):
    t = i / 299.0
    if t < 1 / 3:
        y = [scaled(128 * 3 * t), 0.0]
        z = [0.0]
    elif t < 2 / 3:
        y = [1.0, scaled(128 * (3 * t - 1))]
        z = [0.0]
    else:
        y = [1.0, 1.0]
        z = [np.sin(12 * np.pi * t)]
    hops.append((z, y))

n = len(hops) * state.hop
t0 = time.time()
audio = symod.ola_render(state, hops, n)
elapsed = time.time() - t0
print(f"rendered {n / 48000:.2f} s in {elapsed:.2f} s "
      f"(real-time factor {elapsed / (n / 48000):.2f})")

audio = audio / max(np.max(np.abs(audio)), 1e-9) * 0.9
dsmod.write_wav(audio, "/tmp/demo_sweep.wav", sample_rate=48000)
print("wrote /tmp/demo_sweep.wav")

print("\nfor the live A/B endpoint run:")
print("  synthclone serve --checkpoint /tmp/demo_model.ckpt --port 8765")
print("then open frontend/index.html (see README).")
