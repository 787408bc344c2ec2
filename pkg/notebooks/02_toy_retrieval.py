"""
Training the dual encoder on a planted-keyword corpus
=====================================================

Every context and its response share one made-up keyword; everything else is
filler drawn from a shared pool. Chance for R_20@1 is 0.05.

Run with ``python3 notebooks/02_toy_retrieval.py [steps]`` (default 600; a
few minutes on one CPU core).
"""

import sys
import time

import numpy as np

from convertlite import synthetic as syn
from convertlite.evaluation import mrr, recall_at_k
from convertlite.experiments import keyword_task
from convertlite.training import EncoderView

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600

# %%
records, groups = syn.keyword_pairs(n_pairs=5, seed=0)
for r in records[:3]:
    print(f"{r.context:40} | {r.response}")

# %%
# 6 blocks, 128 wide, batch 64, quantization-aware. The held-out curve is
# printed every 100 steps.
t0 = time.time()
run = keyword_task(steps=steps, eval_every=max(steps // 6, 1))
print(f"trained {steps} steps in {time.time() - t0:.0f}s")
for step, r1 in run.curve:
    print(f"  step {step:5d}  R_20@1 {r1:.3f}  " + "#" * int(40 * r1))

# %%
# The loss drops from about K*log K as the score scale anneals upward.
losses = run.losses
print("loss, first vs last 20 steps:", losses[:20].mean().round(2), losses[-20:].mean().round(2))

# %%
# Same instances through the public metric functions, both precisions.
for quantized in (True, False):
    view = EncoderView(run.model, quantized)
    r1 = recall_at_k(run.instances, view, 20, 1)
    r5 = recall_at_k(run.instances, view, 20, 5)
    print(f"quantized={quantized!s:5}  R@1 {r1:.3f}  R@5 {r5:.3f}  "
          f"MRR {mrr(run.instances, view):.3f}")

# %%
# Nearest responses for one held-out context.
inst = run.instances[0]
h_x = run.model.encode_context([inst.context])[0]
h_y = run.model.encode_response(inst.candidates)
order = np.argsort(-(h_y @ h_x))[:3]
print("context:", inst.context)
for i in order:
    mark = "*" if i == inst.relevant_index else " "
    print(f" {mark} {h_y[i] @ h_x:+.3f}  {inst.candidates[i]}")
