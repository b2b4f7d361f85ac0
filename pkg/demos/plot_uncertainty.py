"""
Two views of epistemic uncertainty
==================================

Entropy over Monte Carlo dropout passes next to the cheap alternative, the
absolute disagreement between the two decoders.
"""

import numpy as np

from mcseg.datapipe import desk_synthetic_spec, normalize_intensity, synthetic_case
from mcseg.inference import plan_windows, predict_windows
from mcseg.netarch import NetworkConfig, build_network, forward_with_dropout
from mcseg.uncertainty import decoder_discrepancy, entropy_from_passes, mc_dropout_uncertainty

# The entropy of the averaged prediction, for a single voxel seen by two passes.
print("two passes 0.8 and 0.6 ->", entropy_from_passes(np.array([[0.8], [0.6]]))[0])

vol, _ = synthetic_case(desk_synthetic_spec(seed=0), 0)
x = normalize_intensity(vol.data)
net = build_network(NetworkConfig(levels=3, base_channels=8, dropout_rate=0.5), seed=1).eval()
plan = plan_windows(x.shape, (32, 32, 24), (16, 16, 8))


def predict(arr, seed):
    return predict_windows(lambda b: forward_with_dropout(net, b, seed), arr, plan)


u = mc_dropout_uncertainty(net, x, n_passes=4, seed=0, predict=predict)
p_a, p_b = predict_windows(net, x, plan)
d = decoder_discrepancy(p_a, p_b)
print("mc dropout", u.summary(0.5))
print("discrepancy", d.summary(0.1))
# how well the two maps agree on where the model is unsure
print("correlation", float(np.corrcoef(u.data.ravel(), d.data.ravel())[0, 1]))
