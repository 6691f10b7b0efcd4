"""Question-only replay with distillation for continual VQA, on a numpy autodiff core."""
from .autodiff import Tensor, backward, no_grad
from .benchmark import Benchmark, BenchmarkConfig, build_schedule, generate_all
from .memory import QuestionMemory, TripletBuffer
from .metrics import RunMetrics, average_forgetting, average_performance
from .model import Model, ModelConfig
from .trainer import TrainConfig, load_data, run_sequence

__all__ = [
    "Tensor", "backward", "no_grad", "Benchmark", "BenchmarkConfig", "build_schedule",
    "generate_all", "QuestionMemory", "TripletBuffer", "RunMetrics", "average_forgetting",
    "average_performance", "Model", "ModelConfig", "TrainConfig", "load_data", "run_sequence",
]
