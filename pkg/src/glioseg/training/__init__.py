from .adam import AdamState, NonFiniteGradient, adam_step
from .augment import AugmentConfig, augment_patch
from .loop import EpochRecord, TrainConfig, TrainingDiverged, TrainRun, make_batch, parse_log, train
from .loss import multiple_dice_loss
from .pretrain import PretrainConfig, PretrainResult, pretrain_encoder
from .sampling import sample_origin, sample_patch
