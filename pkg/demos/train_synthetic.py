"""
Training on synthetic planar scenes
===================================

Generate a handful of scenes, train the default model for a few hundred
steps, and look at depth metrics and the predicted uncertainty.
"""

import numpy as np

from graphdepth.data import SceneConfig, generate_dataset, stack
from graphdepth.model import GraphDepthModel, ModelConfig
from graphdepth.trainer import TrainConfig, evaluate, train_loop

scenes = SceneConfig(planes_min=1, planes_max=2, depth_min=2.0, seed=100)
train = generate_dataset(scenes, 8)
print("depth range in the set:", min(s.depth.min() for s in train), max(s.depth.max() for s in train))

model = GraphDepthModel(ModelConfig(seed=0))
print("parameters:", model.parameter_count())
print("before:", evaluate(model, train))

result = train_loop(model, train, TrainConfig(steps=300, validate_every=0))
log = result.train_log
print(f"L1 {log[0]['l1']:.3f} -> {log[-1]['l1']:.3f}; largest clipped norm {result.max_clipped_norm:.6f}")
print("after:", evaluate(model, train))

# sigma = exp(S / 2) per pixel
pred = model.predict(stack(train[:1]).rgb)
sigma = pred.sigma()[0]
print("sigma quantiles (5/50/95%):", np.percentile(sigma, [5, 50, 95]).round(3))
