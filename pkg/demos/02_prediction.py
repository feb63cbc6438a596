"""Open-loop prediction: nominal model, GP correction and KNODE side by side.

Each model re-simulates an 8 s drag-plant flight from its first state under
the recorded inputs; DTW between predicted and true positions scores it.
Pass a trained KNODE model file (from `knode-mpc train`) to skip training.
"""

import sys

from knode_mpc import (
    DragPlant, GpCorrectedModel, MpcConfig, NominalModel, QuadParams, RefSpec, TrainConfig, gp_fit,
    gp_training_set, load_model, make_hybrid, prediction_experiment, train_knode, velocity_features,
)
from knode_mpc.evaluation import fly_reference

P = QuadParams()
plant, pilot = DragPlant(P), NominalModel(P)
train = [fly_reference(pilot, plant, RefSpec(radius=r), 8.0, MpcConfig())[0] for r in (3.0, 6.0)]

if len(sys.argv) > 1:
    knode = load_model(sys.argv[1])
else:
    val = fly_reference(pilot, plant, RefSpec(radius=4.0), 8.0, MpcConfig())[0]
    knode, _ = train_knode(make_hybrid(P, train, input_mask=velocity_features()), train, val, TrainConfig())

gp = GpCorrectedModel(P, gp_fit(*gp_training_set(P, train, 80)))
models = {"nominal": pilot, "gp": gp, "knode": knode}

specs = [RefSpec(radius=4.0), RefSpec(radius=8.0), RefSpec("lemniscate", radius=3.0)]
res = prediction_experiment(models, plant, specs)
print(f"{'spec':16s} {'model':8s} {'DTW':>10s}")
for row in res.rows:
    print(f"{row['spec']:16s} {row['model']:8s} {row['dtw_raw']:10.1f}")
