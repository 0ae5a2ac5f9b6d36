"""Deterministic Bayesian inference for latent Gaussian models.

The package fits hierarchical models whose latent field is Gaussian with a
sparse precision matrix: a Gaussian approximation of the latent conditional
is built at each point of a weighted hyperparameter grid, and posterior
marginals, diagnostics and samples come from the resulting mixture.

Typical use::

    import lgmfit

    result = lgmfit.fit(model_dict, data_frame)
    print(result.summary_fixed)
    marg = result.marginals_fixed["x"]
    lgmfit.pmarginal(0.0, marg)
"""

__version__ = "0.1.0"

from .errors import (
    ConfigNotStored,
    DataError,
    FitFailed,
    LgmError,
    MarginalError,
    ModelSpecError,
    NonConvergence,
    NotPositiveDefinite,
)
from .model import (
    DataTable,
    Model,
    ModelSpec,
    build_model,
    load_model,
    load_table,
    normalize_model,
    parse_model_spec,
    serialize_model_spec,
)
from .engine import Diagnostics, FitResult, fit
from .marginals import (
    Marginal,
    dmarginal,
    emarginal,
    hpdmarginal,
    mmarginal,
    pmarginal,
    qmarginal,
    read_marginal_csv,
    rmarginal,
    tmarginal,
    write_marginal_csv,
    zmarginal,
)
from .sampler import (
    Draw,
    SampleList,
    hyperpar_sample,
    posterior_sample,
    posterior_sample_eval,
)

__all__ = [
    "__version__",
    # errors
    "LgmError",
    "ModelSpecError",
    "DataError",
    "NotPositiveDefinite",
    "NonConvergence",
    "MarginalError",
    "FitFailed",
    "ConfigNotStored",
    # model description and data
    "ModelSpec",
    "Model",
    "DataTable",
    "parse_model_spec",
    "normalize_model",
    "serialize_model_spec",
    "build_model",
    "load_model",
    "load_table",
    # fitting
    "fit",
    "FitResult",
    "Diagnostics",
    # marginal toolkit
    "Marginal",
    "dmarginal",
    "pmarginal",
    "qmarginal",
    "tmarginal",
    "emarginal",
    "hpdmarginal",
    "zmarginal",
    "mmarginal",
    "rmarginal",
    "read_marginal_csv",
    "write_marginal_csv",
    # sampling
    "Draw",
    "SampleList",
    "posterior_sample",
    "hyperpar_sample",
    "posterior_sample_eval",
]
