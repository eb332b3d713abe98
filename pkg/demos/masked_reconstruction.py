"""Recovering a missing camera's features from its ring neighbors."""

import numpy as np

from mvocc.pipeline import PipelineConfig, PipelineState
from mvocc.reconstruction import recover_features
from mvocc.scenes import dataset

scenes = dataset("train", 30, base_seed=7)
state = PipelineState(PipelineConfig(seed=0, epochs=4, rvm_max=3))
state.train(scenes)

sample = dataset("val", 1, base_seed=7)[0]
full = state.encode(sample.images)
target = full[2].data.data

# Mask view 2 and rebuild it. The reference the decoder sees is stitched
# from view 1's right edge, a learned mask token tile, and view 3's left
# edge.
feats = state.encode(sample.images, masked={2})
print("statuses before:", [f.status.value for f in feats])
trace = []
recovered = recover_features(feats, {2}, state.decoder, state.config.overlap_cols, trace=trace)
print("statuses after: ", [f.status.value for f in recovered])
print("recovery trace (view, left source, right source):", trace)

rebuilt = recovered[2].data.data
tile = state.decoder.tiled_mask_token(state.config.feat_width).data
print(f"mse rebuilt vs target: {((rebuilt - target) ** 2).mean():.4f}")
print(f"mse mask-token tile:   {((tile - target) ** 2).mean():.4f}")
print(f"mse all zeros:         {(target ** 2).mean():.4f}")

# With several missing views the recovery runs in ascending order, so an
# already-rebuilt view can serve as a neighbor for the next one. A
# neighbor that is still missing contributes the mask token instead.
feats = state.encode(sample.images, masked={1, 2, 5})
trace = []
recover_features(feats, {1, 2, 5}, state.decoder, state.config.overlap_cols, trace=trace)
for view, left, right in trace:
    print(f"view {view}: left={left:14s} right={right}")

# The decoder counts its invocations; downstream latency accounting
# leans on this. How much rebuilt features buy in occupancy accuracy is
# a statistical question over many scenes; see train_and_evaluate.py.
print("decoder invocations so far:", state.decoder.invocations)
