"""Training-free retrieval-augmented image restoration at desk scale."""
from .dual_chain import (Generated, HQRef, NoRef, RandomRef, Reference, ReferenceProvider,
                         RestorationResult, Retrieved, SelfRef, fallback_restore,
                         prepare_reference, run_paired_restoration)
from .injection import (AttentionBundle, FusionTrace, GateMask, InjectionConfig, apply_injection,
                        attention_allocation, distribution_align, fuse, gate_mask,
                        separate_attention)
from .retrieval import (EmbeddingIndex, EmbeddingRecord, RetrievalResult, TinyGist, build_index,
                        embed, load_index, query, reference_weights, save_index)

__version__ = "0.1.0"
