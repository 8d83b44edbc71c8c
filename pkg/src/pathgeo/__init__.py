"""Path-norm geometry for ReLU networks at desk scale.

Modules: netgraph (DAG nets, forward/backward, path enumeration),
pathnorm (path regularizer and curvature scalings), optim (losses and the
update-rule family), measures (margin, norm, sharpness and condition
diagnostics), invariance (rescalings, balancing, path-Jacobian rank,
shattering construction), data (synthetic tasks, IDX ingestion, label
protocols), train (schedules), protocols (desk-scale experiments),
cli (the `pathgeo` command).
"""

from . import (  # noqa: F401
    data,
    errors,
    invariance,
    measures,
    netgraph,
    optim,
    pathnorm,
    protocols,
    train,
)

__version__ = "0.1.0"
