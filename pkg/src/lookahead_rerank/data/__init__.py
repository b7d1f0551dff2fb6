from .dataset import (
    DatasetFormatError,
    load_dataset,
    load_requests,
    save_dataset,
    save_requests,
    split_leave_one_out,
    synth_generate,
)
from .env import EnvParams, EnvSpec, count_distribution, env_list_value, env_prefix_values
from .types import ExposureRecord, Item, RequestBatch, RerankConfig, RerankRequest

__all__ = [
    "DatasetFormatError",
    "EnvParams",
    "EnvSpec",
    "ExposureRecord",
    "Item",
    "RequestBatch",
    "RerankConfig",
    "RerankRequest",
    "count_distribution",
    "env_list_value",
    "env_prefix_values",
    "load_dataset",
    "load_requests",
    "save_dataset",
    "save_requests",
    "split_leave_one_out",
    "synth_generate",
]
