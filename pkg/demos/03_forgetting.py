# Catastrophic forgetting on a small benchmark: plain fine-tuning versus
# question-only replay with distillation. Takes a few minutes on one CPU.
import numpy as np

from quadlab.benchmark import BenchmarkConfig
from quadlab.trainer import TrainConfig, load_data, run_sequence, summary_dict

np.set_printoptions(precision=2, suppress=True)

data = load_data(BenchmarkConfig(train_size=200, test_size=60, novel_size=60))
skills = list(data.schedule.skills)

for method in ("vanilla", "quad"):
    metrics, state = run_sequence(data, TrainConfig(method=method, epochs=3))
    s = summary_dict(metrics)
    print(f"\n{method}: AP {100 * s['AP']:.1f}%  Forget {100 * s['Forget']:.1f}%")
    print("rows = tasks", skills, "; columns = after each task")
    print(metrics.a)
    # fraction of old-task answers that land in some other skill's vocabulary
    print("out-of-answer-set rate per task:", np.round(s["ooas_per_task"], 2))
    if state.memory is not None:
        print("memory holds", len(state.memory), "questions and no images")
