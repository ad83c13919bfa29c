"""Winner-take-all dictionary learning with Oja-style updates and deep residual stacking."""

__version__ = "0.1.0"

from .core import (
    Assignment,
    Atom,
    DecompositionTrace,
    DeepModel,
    Dictionary,
    DimensionError,
    NotOrthogonalError,
    OjaNetError,
    TrainConfig,
    ZeroAtomError,
    ZeroInputError,
    project_coefficient,
    reconstruct_complete,
)
from .selection import residual_step, select_atom, shallow_error
from .shallow import (
    TrainReport,
    assign_all,
    train_shallow_batch,
    train_shallow_online,
    update_atom_lambda1,
    update_atom_lambda2,
    update_atom_oja,
    update_atom_pca,
)
from .deep import decompose, fit_layer_multi_atom, flatten_template, train_deep
from .grad import jacobian_init, jacobian_propagate, loss_gradient
from .data import load_csv, load_idx, load_model, save_model, gen_clustered_lines, gen_uniform_sphere
from .metrics import cluster_purity, energy_per_level, reconstruction_error
