"""Update-aware robust optimal model predictive control.

Modules
-------
model
    Discrete-time systems, constraint rows and costs (quadrotor and two toys).
nlp
    Smooth constrained NLP solves (augmented Lagrangian or SLSQP).
sip
    Semi-infinite programs by local reduction, open-loop robust plans.
nested
    The update-aware nested problem over a scenario tree.
mpc
    Decreasing-horizon MPC drivers and the Monte Carlo harness.
oracle
    Grid-exhaustive min-max values for the toy systems.
cli
    ``uaro run | compare | certify``.
"""

__version__ = "0.1.0"
