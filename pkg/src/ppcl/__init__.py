"""Desk-scale continual learning over a frozen seq2seq backbone: pooled
prompts with query-key selection, teacher-forced pool assignments, the
baseline method roster, replay, CL metrics, and key-drift diagnostics."""

from .autograd import Tensor, backward, cosine_similarity, softmax_cross_entropy
from .data import Example, SyntheticTaskSpec, TaskStream, build_vocab, load_jsonl, synth4_stream, synth_task
from .harness import (METHODS, ReplayBuffer, RunConfig, RunResult, buffer_insert, buffer_sample,
                      early_stop_check, execute_run, full_scale_config, run, run_individual,
                      run_multitask, run_sequential)
from .metrics import BleuConfig, MetricsMatrix, average_bleu, corpus_bleu, forgetting
from .model import BackboneConfig, BackboneModel, PromptedInput, set_trainable
from .optim import Adam, AdamState, adam_step
from .pool import (PoolTrainConfig, PromptPool, QueryEncoder, SelectionResult, assign_tasks,
                   compute_query, inference_select, init_pool, pp_loss, pptf_loss, select_topk)
from .vocab import Vocabulary

__all__ = [name for name in dir() if not name.startswith("_")]
