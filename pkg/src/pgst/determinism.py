"""Opt-in bit-reproducibility controls.

Setting the environment variable ``PGST_DETERMINISTIC=1`` switches the
package into a mode where every pipeline stage (data generation, style
fitting, fine-tuning, evaluation) produces byte-identical artifacts across
repeated runs with the same inputs and seeds: single-threaded math, no
batched fan-out where summation order could differ, and no wall-clock
fields in emitted metadata.
"""

import os

import torch

DETERMINISM_ENV = "PGST_DETERMINISTIC"


def deterministic_mode() -> bool:
    """True when the current process runs under PGST_DETERMINISTIC=1."""
    return os.environ.get(DETERMINISM_ENV, "") == "1"


def configure_threads() -> None:
    """Pin torch to one thread when deterministic mode is active.

    Safe to call more than once; a no-op outside deterministic mode.
    """
    if deterministic_mode():
        try:
            torch.set_num_threads(1)
        except RuntimeError:
            pass  # thread pool already started; single-core hosts are fine
