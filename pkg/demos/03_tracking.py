"""Closed-loop tracking with nominal MPC and KNODE-MPC on the drag plant.

Usage: python demos/03_tracking.py MODEL.json [radius]

MODEL.json is a trained KNODE model, e.g. runs/default/models/knode.json
after `knode-mpc run-all`.
"""

import sys

import numpy as np

from knode_mpc import DragPlant, MpcConfig, NominalModel, QuadParams, RefSpec, gen_reference, load_model
from knode_mpc.evaluation import fly_reference, position_errors

if len(sys.argv) < 2:
    sys.exit(__doc__)
P = QuadParams()
knode = load_model(sys.argv[1])
spec = RefSpec(radius=float(sys.argv[2]) if len(sys.argv) > 2 else 4.0)
planned = gen_reference(spec, 8.0, 2e-3)

for name, model in (("nominal", NominalModel(P)), ("knode", knode)):
    tr, log = fly_reference(model, DragPlant(P), spec, 8.0, MpcConfig())
    err = position_errors(tr.positions, planned.positions)
    radial = np.linalg.norm(tr.positions[:, :2], axis=1) - spec.radius
    print(f"{name:8s} DTW {err['dtw_raw']:7.2f}  RMSE {err['rmse']:.3f} m  "
          f"mean radial offset after ramp {radial[1000:].mean():+.3f} m  "
          f"SQP iterations/solve {np.mean(log.iterations):.2f}")
