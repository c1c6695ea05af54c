"""Relational-database foundation model: ingestion, temporal sampling, cell encoding, training."""

from .errors import RdbError
from .features import FeatureStore, FloatCodec, StubEmbedding, make_provider, pretrain_float_codec
from .graph import HeteroGraph, build_graph, load_graph, save_graph
from .ingest import RdbManifest, load_manifest, load_tables
from .model import ModelConfig, RDBModel
from .sampler import SampleConfig, sample_subgraph
from .training import Checkpoint, TaskData, TaskSpec, TrainConfig, finetune_and_eval, open_rdb

__version__ = "0.1.0"
