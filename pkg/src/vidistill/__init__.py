"""Video dataset distillation toolkit."""
from .config import RunConfig, load_config
from .disentangle import (CombinerArch, CombinerSpec, DistilledArtifact, DynamicMemory, StageConfig, StaticMemory,
                          build_combiner, check_budget, combine, distill_disentangled, pair_memories, stage1_static,
                          stage2_dynamic)
from .evaluation import (EvalConfig, EvalReport, StorageReport, coreset, dynamics_grouping, evaluate,
                         interframe_differences, storage_bytes)
from .exceptions import (ArtifactFormatError, BudgetExceededError, ChecksumError, DegenerateTrajectoryError,
                         InvalidConfigError, InvalidInputError, MagicError, NonFiniteLossError, TruncatedError,
                         VersionError, VidistillError)
from .matching import (ExpertTrajectory, InnerConfig, MatchConfig, SyntheticSet, distill,
                       generate_expert_trajectories, loss_distribution, loss_gradient, loss_trajectory)
from .models import ArchSpec, ModelState, build_model, forward
from .serialization import load_artifact, save_artifact
from .temporal import (CompressionSchedule, ParametricInterpolator, SegmentPairing, check_consistency, interpolate,
                       segment_pairs, train_parametric_interpolator)
from .video import (FrameDataset, MovingShapesConfig, VideoClip, VideoDataset, augment_hflip, augment_shift,
                    generate_moving_shapes, sample_clip, select_frames)

__version__ = "0.1.0"
