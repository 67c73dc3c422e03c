"""EEG artifact detection: FFT/Haar energy features, Extra-Trees, pruning to a
memory budget and a 9-byte-per-node compact forest format."""

from .compact import (CompactForest, CompactTree, deserialize, pack, pack_forest,
                      packed_size_bytes, serialize, traverse, unpack, unpack_forest)
from .dataset import (AnnotatedRecording, Annotation, FeatureTable, FrequencyGroup,
                      LabelScheme, SynthConfig, assign_labels, build_feature_table,
                      extract_group, load_corpus, split_patient_independent, synth_corpus)
from .evaluation import Metrics, PruneCurve, bench_inference, evaluate, f1, prune_curve
from .features import (FeatureExtractor, Recording, Window, decimate, dwt_detail_energies,
                       extract_features, haar_dwt, highband_energy, linear_resample,
                       rfft_spectrum, split_windows)
from .forest import (ExtraTreesArtifactClassifier, Forest, TreeNode, TreeParams,
                     cost_complexity_sequence, grow_forest, grow_tree, predict_forest,
                     prune_at_alpha, prune_to_budget)

__version__ = "0.1.0"
