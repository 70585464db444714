"""Finite-rate CSI feedback for MU-MIMO zero-forcing precoding.

Synthetic clustered-multipath channels, quantized autoencoder front
ends, feedback-conditioned flow decoders, ZF rate/interference metrics,
and posterior directional-geometry diagnostics.
"""

from .channels import (ArrayGeometry, ClusterModelConfig, Dataset,
                       build_dataset, export_channels_csv, from_stacked_real,
                       generate_channel, load_dataset, norm_direction,
                       save_dataset, steering_vector, to_stacked_real)
from .checkpoint import (load_flow, load_frontend, load_regressor,
                         read_checkpoint, save_flow, save_frontend,
                         save_regressor, write_checkpoint)
from .errors import (DegenerateMeanError, DimensionMismatchError, FlowCsiError,
                     InvalidConfigError, MalformedBitsError,
                     MissingDependencyError, SingularChannelError,
                     TrainingDivergedError)
from .experiments import (ExperimentConfig, Workspace, analyze_cells,
                          eval_methods, gen_data, train_method, verify_theory)
from .flow import (FlowConfig, FlowModel, FlowTrainingSample, UNetRegressor,
                   conditioning, decode_direct, flow_loss, integrate_euler,
                   integrate_midpoint, make_training_sample, refine,
                   train_flow, train_unet_regressor)
from .frontend import (FrontendModel, FrontendNet, LatentQuantizer,
                       QuantizerSpec, bits_to_indices, chordal_loss,
                       dequantize, indices_to_bits, mse_loss, mulaw_compand,
                       mulaw_expand, pack_bits, quantize, train_frontend,
                       uniform_levels, unpack_bits)
from .geometry import (CertificationReport, FeedbackCell, InterferenceEstimate,
                       LocalTermReport, MixturePosterior, alignment_gap,
                       certify_same_projector_case, chordal_distortion,
                       chordal_sq, collect_cells, conditional_mean_direction,
                       extract_modes, interference_cm, interference_ps,
                       local_terms, mds_embed, optimal_direction,
                       projector_complement, random_same_projector_instance,
                       second_moment)
from .nn import (EmaTracker, GaussianFourierFeatures, ResidualBlock1d,
                 UNetConfig, VectorFieldUNet, finite_difference_gradients,
                 grad, group_count)
from .precoding import (MetricsRecord, Precoder, aggregate_desired,
                        aggregate_interference, append_metrics_csv,
                        dft_profile, nmse_db, sum_rate, user_rate, zf_precoder)

__version__ = "0.1.0"
