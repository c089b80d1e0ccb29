"""Grid-iterative diffusion purification (GrIDPure) with a desk-scale harness for
protective-perturbation attacks, natural transforms and image-quality metrics.
"""

from .attack import (
    AttackConfig,
    AttackTrace,
    adaptive_attack,
    antidb_attack,
    eot_attack,
    param_rel_diff,
    pgd_attack,
)
from .corpus import Corpus, make_corpus, write_corpus
from .diffusion import (
    AffineDenoiser,
    BackendError,
    DenoiserBackend,
    ExternalDenoiser,
    GradientUnavailableError,
    LossEstimate,
    NoiseSchedule,
    OracleDenoiser,
    PurifyChain,
    build_schedule,
    ddim_reverse,
    diffusion_loss,
    forward_diffuse,
    loss_grad_input,
    predict_eps,
    train_affine,
)
from .gridgeom import GridPlan, Tile, crop_tile, merge_tiles, plan_grids
from .imagecore import RngState, load_image, read_tensor, sample_gaussian, save_image, write_tensor
from .metrics import MetricReport, mse, psnr, ssim
from .purify import PurifyConfig, diffpure, gdp, gridpure
from .transforms import QuantTables, gaussian_blur, jpeg_roundtrip, quant_tables

__version__ = "0.1.0"
