"""News-driven stock trend prediction.

Pipeline: label open-to-open rises into DOWN/PRESERVE/UP, window daily news
corpora into samples, train a hybrid attention network (optionally with
self-paced sample weighting), then trade the predictions in a top-K daily
backtest.
"""

__version__ = "0.1.0"

from .corpus import (  # noqa: F401
    DailyCorpus,
    DatasetSplit,
    LabelThresholds,
    NewsRecord,
    PriceBar,
    Sample,
    Trend,
    Vocabulary,
    WordEmbeddings,
)
from .model import ForwardTrace, HyperParams, ModelParams  # noqa: F401
