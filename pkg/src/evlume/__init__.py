"""evlume: event-guided low-light video enhancement.

Event streams and voxel grids, a Retinex-style light-up front end with an
SNR prior, SNR-masked regional feature selection fused into a channel
attention encoder/decoder with a recurrent bottleneck, plus the losses,
metrics, synthetic paired data, and train/eval tooling around it.
"""

from .alignment import (CaptureInterval, Matching, alignment_error_stats,
                        match_sequences)
from .events import (Event, EventStream, VoxelGrid, build_voxel_grid,
                     simulate_events)
from .harness import (TrainConfig, TrainResult, ablate, enhance, evaluate,
                      train)
from .network import (EnhanceNet, GruState, ModelConfig, build_model,
                      count_params, count_params_flops, load_checkpoint,
                      load_model, save_checkpoint)
from .objectives import (LossConfig, MetricReport, psnr, psnr_star,
                         reconstruction_loss, ssim, temporal_loss, total_loss)
from .preprocess import (IlluminationEstimator, compute_snr_map,
                         illumination_prior, light_up, threshold_snr)
from .synth import (DegradeConfig, Manifest, SceneConfig, degrade,
                    generate_scene, make_dataset)

__version__ = "0.1.0"
