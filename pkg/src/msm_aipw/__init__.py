"""Cross-fitted AIPW estimation of the causal log hazard ratio in a marginal
structural Cox model, with the IPW, naive Cox and full-data comparators, an
analytic oracle for the estimand under misspecification, and a Monte Carlo
harness.
"""
from .data import Dataset, FoldAssignment, assign_folds, load_dataset, write_dataset
from .errors import (DataError, DegenerateInformationError, NuisanceError, SeparationError,
                     SolverError)
from .estimator import (AipwFit, BootstrapResult, CoxFit, IpwFit, bootstrap, fit_aipw,
                        fit_aipw_nuisance, fit_full_data, fit_ipw, fit_naive_cox, risk_contrasts)
from .nuisance import NuisanceSpec, NuisanceTriple, default_spec, identity_nuisance, identity_spec
from .oracle import beta_star, law_from_descriptor

__version__ = "0.1.0"

__all__ = [
    "AipwFit", "BootstrapResult", "CoxFit", "DataError", "Dataset", "DegenerateInformationError",
    "FoldAssignment", "IpwFit", "NuisanceError", "NuisanceSpec", "NuisanceTriple",
    "SeparationError", "SolverError", "assign_folds", "beta_star", "bootstrap", "default_spec",
    "fit_aipw", "fit_aipw_nuisance", "fit_full_data", "fit_ipw", "fit_naive_cox",
    "identity_nuisance", "identity_spec", "law_from_descriptor", "load_dataset",
    "risk_contrasts", "write_dataset",
]
