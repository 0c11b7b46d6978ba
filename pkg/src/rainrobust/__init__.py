"""Joint defense workbench: rain-streak degradation plus adversarial
perturbations against semantic segmentation, at desk scale.

Submodules:
  synthesis   paired (clean, rain, rainy, labels) corpus generation and disk IO
  models      tiny segmentation / derain reference nets, checkpoints, gradients
  attacks     l-inf projection, loss-raising and mirror perturbation generators
  training    pretraining, adversarial training, robust-derain regimes
  metrics     confusion-matrix pixel metrics, PSNR, SSIM
  evaluation  pipelines x attacks comparison grid, reports, image dumps
  config/cli  reproducible run configuration and the command-line surface
"""

from .attacks import AttackSpec, NaaTrace, ama_generate, attack_loss, cw_loss, naa_generate, project
from .evaluation import (
    MetricsReport,
    PipelineSpec,
    cross_model_eval,
    default_attack_grid,
    evaluate_defense,
    per_class_report,
    qualitative_dump,
)
from .metrics import IGNORE_ID, ConfusionMatrix, accumulate, allacc, macc, miou, psnr, ssim
from .models import (
    DerainNet,
    SegNet,
    fd_directional,
    grad_wrt,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .synthesis import (
    PairedSample,
    RainParams,
    SceneParams,
    apply_rain,
    calibrate_rain,
    load_dataset,
    make_dataset,
    save_dataset,
    synth_rain_layer,
    synth_scene,
)
from .training import (
    DefenseLoss,
    Pipeline,
    TrainConfig,
    TrainResult,
    assemble_nat,
    pretrain_derain,
    pretrain_seg,
    train_at,
    train_pearl,
    train_pearl_ama,
)

__version__ = "0.1.0"
