"""Multi-agent decision transformer: offline pre-training and online fine-tuning on a grid team task."""
from .env import GridTeamEnv, TaskSpec, UniversalDims, get_spec
from .model import MADT, ModelConfig
from .offline import OfflineConfig, pretrain
from .online import PPOConfig, evaluate, finetune

__all__ = ["GridTeamEnv", "TaskSpec", "UniversalDims", "get_spec", "MADT", "ModelConfig", "OfflineConfig",
           "pretrain", "PPOConfig", "evaluate", "finetune"]
