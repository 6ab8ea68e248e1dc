"""Module-wise selective low-rank adaptation at desk scale.

A continuous relaxation of the module-selection matrix is trained by
alternating bilevel descent, discretized to a binary top-k selection,
and fine-tuned with optional cross-layer weight sharing; a companion
verification suite measures the Gram-matrix eigenvalue and convergence
behavior that motivates the selection rule.
"""

from .adapters import FAMILIES, LowRankAdapter, SharedAdapterBank, gated_forward, init_adapter
from .dam import DamState, attach_sharing, bilevel_step, discretize, gamma_from_logits, init_dam, row_entropy
from .data import Dataset, SplitPlan, gen_planted, gen_sphere, ingest_csv, make_split
from .models import ModularNet, TheoryNet, init_modular_net, init_theory_net, modular_forward, theory_forward, theory_grad, theory_loss
from .numerics import SeededRng, gaussian_matrix, jacobi_eigenvalues, min_eigenvalue, sign_vector, solve_spd
from .pipeline import RunConfig, RunReport, gd_step, load_checkpoint, run_all, run_stage1, run_stage2, save_checkpoint
from .theory import GramEstimate, eigen_compare, estimate_gram, fit_convergence_rate, generalization_term, verify_theory

__version__ = "0.1.0"
