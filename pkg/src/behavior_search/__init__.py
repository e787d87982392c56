"""Personalized product search with graph-enriched user modeling."""
from .corpus import (DatasetSplit, PreparedCorpus, ReviewRecord, SuccessiveSequence, Vocabulary,
                     build_vocabulary, extract_queries, ingest, prepare_corpus, segment_sequences,
                     split, tokenize)
from .evaluation import EvalCase, EvalReport, build_cases, evaluate, metric_hr, metric_mrr, metric_ndcg
from .graph import (BehaviorGraph, PropagationConfig, build_graph, closed_form_propagate, diversity,
                    jumping_propagate, propagate_once, spectral_diagnostics, verify_theorem1)
from .model import ModelParams, UserContext, init_params, rank
from .training import TrainConfig, build_sampler, nce_loss, train

__version__ = "0.1.0"
