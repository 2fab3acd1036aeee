"""Library for joint aleatoric (MC-Dropout) and epistemic (virtual-outlier
energy score) uncertainty estimation of classifiers.

Typical usage:

```python
from mcvos import TrainConfig, UncertaintyEvaluator, VosConfig, fit_model, prepare_data

data = prepare_data(seed=0)
model, vos, logs = fit_model(data.train, TrainConfig(epochs=20), vos_config=VosConfig(warmup_epochs=5))
evaluator = UncertaintyEvaluator(passes=10)
scored = evaluator.score_datasets(model, data.test, data.ood)
for report in evaluator.reports(scored, label='toy'):
    print(report.to_dict())
```

"""

__version__ = '0.1.0'

from .core import McDropoutRunner, UncertaintyEvaluator, fit_model, prepare_data
from .database import Database
from .mlp import MlpModel, TrainConfig
from .vos import VosConfig, VosState
from .utils import logger, McvosError, ConfigError, DataError
from . import datasets
from . import metrics

__all__ = [
    'McDropoutRunner',
    'UncertaintyEvaluator',
    'fit_model',
    'prepare_data',
    'Database',
    'MlpModel',
    'TrainConfig',
    'VosConfig',
    'VosState',
    'logger',
    'McvosError',
    'ConfigError',
    'DataError',
    'datasets',
    'metrics',
]
