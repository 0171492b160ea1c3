"""Retrieval-masked data augmentation and focus fine-tuning for a toy causal LM."""

from .errors import DataError, NumericError, UsageError
from .text_corpus import (ANSWER_MARKER, ARTICLE_MARKER, EOS_TOKEN, MASK_TOKEN,
                          PAD_TOKEN, QUESTION_MARKER, UNK_TOKEN, Document,
                          QASample, Vocab, build_prompt, detokenize, read_jsonl,
                          read_vocab, sentence_split, split_words, tokenize,
                          write_jsonl, write_vocab)
from .retrieval_augment import (AugmentedSample, Chunk, EncoderTransportError,
                                HashEmbedder, HttpEncoderClient, augment_dataset,
                                augment_sample, augmented_to_sample, chunk_fixed,
                                chunk_sentences, embed, mask_augment,
                                read_augmented_jsonl, rerank_documents, score,
                                select_top_k, write_augmented_jsonl)
from .dataset_synth import (LookupUniverse, SynthSpec, lookup_universe,
                            position_sweep_set, pretrain_rows, synth_multidoc,
                            synth_multiqa_corpus, synth_needle_corpus)
from .model import (FocusLM, ForwardOutput, LoraConfig, ModelConfig,
                    attach_lora, effective_weight, eos_representation,
                    init_params, load_checkpoint, merge_lora, reachability,
                    save_checkpoint, trainable_parameters)
from .training import (Ablation, GradCheckReport, LossBreakdown, OptimState,
                       PairedBatch, TrainConfig, TrainResult, adamw_step,
                       build_batch, clm_loss, contrastive_loss, grad_check,
                       lr_schedule, total_loss, train_loop)
from .evaluation import (EvalReport, HeatmapResult, SweepReport,
                         attention_heatmap, evaluate, exact_match,
                         gold_sentence_index, greedy_decode, mc_accuracy,
                         normalize_answer, sweep_eval, token_f1,
                         write_report_json, write_sweep_csv)

__version__ = "0.1.0"
