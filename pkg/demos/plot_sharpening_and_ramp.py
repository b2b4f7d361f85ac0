"""
Sharpened pseudo labels and the consistency weight
===================================================

How the temperature bends probabilities toward 0 and 1, and how the
consistency weight warms up over training.
"""

import numpy as np
import torch

from mcseg.objectives import RampUpSchedule, consistency_loss, ramp_weight, sharpen

# A row of probabilities, sharpened at a few temperatures.  T=1 leaves them
# alone; small T turns the map into an almost hard mask.
p = torch.linspace(0, 1, 11, dtype=torch.float64)
for T in (1.0, 0.5, 0.1):
    print(f"T={T:<4}", np.round(sharpen(p, T).numpy(), 3))

# Two decoders that disagree mildly.  Each one is pulled toward the other's
# sharpened map; the targets carry no gradient.
p_a = torch.tensor([0.55, 0.70, 0.20], dtype=torch.float64, requires_grad=True)
p_b = torch.tensor([0.45, 0.90, 0.35], dtype=torch.float64, requires_grad=True)
loss = consistency_loss(p_a, p_b)
loss.backward()
print("consistency", float(loss))
print("grad wrt P_A", p_a.grad.numpy())

# The weight starts at exp(-5) of its maximum and reaches it at the end of
# the ramp.
sched = RampUpSchedule(lambda_max=0.1, ramp_iterations=2000)
for t in (0, 500, 1000, 1500, 2000, 3000):
    print(f"t={t:5d} lambda={ramp_weight(t, sched):.5f}")
