"""Common utility functions and the package exception hierarchy."""

import logging
from typing import Hashable, List, Sequence, TypeVar


def get_logger():
    """
    Return a logger configured for use by mcvos modules.
    """
    logger = logging.getLogger('mcvos')
    logger_handler = logging.StreamHandler()
    logger.addHandler(logger_handler)
    logger_formatter = logging.Formatter('%(asctime)s - %(levelname)s: %(message)s',
                                         '%Y-%m-%d %H:%M:%S')
    logger_handler.setFormatter(logger_formatter)
    logger.setLevel(logging.INFO)
    return logger


logger = get_logger()
"""`logging.Logger` object that mcvos logs events to during training,
evaluation and map generation.

Can be used to customize logging:

```python
import logging
from mcvos import logger

logger.setLevel(logging.ERROR)
```
"""


class McvosError(Exception):
    """Base class for all errors raised by mcvos."""


class ConfigError(McvosError):
    """Raised for invalid configuration or command-line usage."""


class DataError(McvosError):
    """Raised for malformed, inconsistent or mis-shaped data."""


class DimensionMismatch(DataError, ValueError):
    """Raised when array dimensions do not agree."""


T = TypeVar('T', bound=Hashable)


def get_duplicates(items: Sequence[T]) -> List[T]:
    """
    Returns a list of any duplicate values in items.
    """
    seen = set()
    duplicates = []
    for item in items:
        if item in seen:
            if item not in duplicates:
                duplicates.append(item)
        else:
            seen.add(item)
    return duplicates
