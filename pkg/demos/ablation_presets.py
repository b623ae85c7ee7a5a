"""
Ablation presets
================

The component presets add one piece at a time; the graph presets swap the
graph family. Each model reports where GraphSAGE actually ran (32 is the
bottleneck, 16 and 8 the first two decoder stages).
"""

from graphdepth.cli import PRESETS
from graphdepth.data import SceneConfig, generate_dataset
from graphdepth.model import GraphDepthModel
from graphdepth.trainer import TrainConfig, train_loop

data = generate_dataset(SceneConfig(height=32, width=32, seed=3), 4)
cfg = TrainConfig(steps=3, batch_size=4)

for table, presets in PRESETS.items():
    print(table)
    for preset in presets:
        model = GraphDepthModel(preset.model)
        res = train_loop(model, data, cfg)
        print(f"  {preset.name:<16} params={model.parameter_count():7d} "
              f"gnn at {sorted(model.gnn_applied)}  loss {res.train_log[-1]['total']:.3f}")
