"""Defense prefix: a learned word embedding that hardens zero-shot CLIP
classification against typographic attacks."""

from .attack_forge import (AttackRecord, DetectionRecord, ImageRecord, preprocess_image,
                           read_manifest, synth_classification_attack, synth_detection_attack,
                           write_manifest)
from .eval_bench import EvalReport, ablate, eval_classification, run_attack_eval
from .gateway import (EmbeddingSequence, EncoderHandle, PromptTemplate, TokenSequence, embed_tokens,
                      encode_image, encode_text_from_embeddings, load_model, tokenize)
from .prefix_core import (ClassFeatureBank, DefensePrefixVector, TrainingConfig, build_class_features,
                          classify_probs, defense_loss, identity_loss, insert_prefix, load_dp, save_dp,
                          total_loss, train_dp)
from .region_eval import eval_regions_gt

__version__ = "0.1.0"
