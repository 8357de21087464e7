"""Merging frozen domain-specific classifiers into one domain-robust student,
without access to their original training data."""

from .errors import (ConfigError, DataFreenessError, DekanError, InputError,
                     PersistenceError, StageError, SynthesisError, TrainingError)
from .models import (BNStats, ClassifierSpec, ConvNet, StudentModel, TeacherModel,
                     capture_batch_bn_stats, forward_logits, load_checkpoint,
                     save_checkpoint, stored_bn_stats)
from .bench import (BenchmarkConfig, DomainTransform, MultiDomainBenchmark,
                    apply_transform, build_benchmark, leave_one_out_splits,
                    load_benchmark, save_benchmark)
from .inversion import (AugmentPolicy, InversionConfig, Provenance,
                        RelaxationMargins, SyntheticDataset, augment_batch,
                        domain_inversion_loss, image_prior_loss,
                        moment_matching_loss, random_stat_gap_samples,
                        relaxation_margins, synthesize_domain_dataset)
from .fusion import (CrossDomainTargets, FusionConfig,
                     compute_cross_domain_targets, cross_domain_loss,
                     synthesize_cross_domain_dataset)
from .distillation import DistillConfig, kd_loss, soft_target, train_student
from .baselines import (avg_pred, best_teacher_oracle, highest_conf,
                        run_multi_di, train_erm)
from .evaluation import (ExperimentResult, accuracy, aggregate_table,
                         export_embeddings, run_protocol)
from .config import ExperimentConfig, SweepConfig, TeacherConfig, load_config
from .orchestrator import PipelineContext, run_all, train_teachers
from .seeds import derive_seed

__version__ = "0.1.0"
