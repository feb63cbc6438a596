"""Learn the aerodynamic drag a first-principles quadrotor model leaves out.

A nominal-MPC pilot flies two circles on a plant with body-frame drag. The
recorded flights train the residual network of a hybrid model, and the learned
residual is compared with the true drag at a few speeds.
"""

import numpy as np

from knode_mpc import (
    DragPlant, MpcConfig, NominalModel, QuadParams, RefSpec, TrainConfig, hover_state, make_hybrid,
    train_knode, velocity_features,
)
from knode_mpc.evaluation import fly_reference

P = QuadParams()
plant, pilot = DragPlant(P), NominalModel(P)

# training flights at 3 m and 6 m, validation at 4 m (8 s each, 2 ms samples)
flights = {r: fly_reference(pilot, plant, RefSpec(radius=r), 8.0, MpcConfig())[0] for r in (3.0, 6.0, 4.0)}
train, val = [flights[3.0], flights[6.0]], flights[4.0]
print(f"{len(train)} training flights of {len(val)} samples")

# drag depends on velocity, so the net only sees the velocity components
h0 = make_hybrid(P, train, input_mask=velocity_features())
h, report = train_knode(h0, train, val, TrainConfig(epochs=1000))
print(f"validation loss {report.initial_val_loss:.3e} -> {report.final_val_loss:.3e} "
      f"(best epoch {report.best_epoch})")

print("speed  true drag   learned   (m/s^2, level flight along x)")
for speed in (0.5, 1.0, 2.0, 3.0, 4.0):
    x = hover_state((0.0, 0.0, 1.0))
    x[3] = speed
    true = plant.derivative(x, P.hover_input)[3:6] - pilot.derivative(x, P.hover_input)[3:6]
    learned = h.residual(x, P.hover_input)[3:6]
    print(f"{speed:5.1f}  {np.linalg.norm(true):9.3f}  {np.linalg.norm(learned):8.3f}")
