"""Two-branch teacher to single-branch student distillation with learned feature rotations."""
from .datagen import GenSpec, LabeledDataset, generate
from .distill import DistillConfig, ExperimentResult, distill_step, kd_loss, run_distillation, total_loss
from .errors import ConfigError, DataError, NumericError, RegistryError, ShapeError, StateError, TokdError
from .frequency import HighPassSpec, dct2, frequency_transform, idct2
from .nn import StepLr
from .rotation import RotationPair
from .student import BackboneSpec, StudentNet, StudentSpec
from .teacher import TeacherNet, TeacherSpec, train_teacher

__version__ = "0.1.0"
