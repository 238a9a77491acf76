from ._demslam import (
    Error,
    HnswIndex,
    ate_rmse,
    config_keys,
    load_tokens,
    reduce_heights,
    run_pipeline,
    save_tokens,
    sim3_exp,
    sim3_log,
)

__all__ = [
    "Error",
    "HnswIndex",
    "ate_rmse",
    "config_keys",
    "load_tokens",
    "reduce_heights",
    "run_pipeline",
    "save_tokens",
    "sim3_exp",
    "sim3_log",
]
