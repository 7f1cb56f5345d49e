from .config import EncoderConfig, ModelConfig
from .network import ModelOutputs, TrafficSpeedNet

__all__ = ["EncoderConfig", "ModelConfig", "ModelOutputs", "TrafficSpeedNet"]
