"""Video-guided, duration-controllable speech synthesis on discrete audio tokens."""

from .corpus import AVExample, Corpus, CorpusConfig, Dataset, build_corpus, generate_corpus, read_dataset, write_dataset
from .decoder import DubModel, ModelConfig
from .evaluation import MetricsReport, av_offset, cer, duration_difference, duration_ratio, evaluate, wer, wsola
from .inference import GenerationConfig, SynthesisResult, dub, generate
from .tokens import AudioCodebook, AudioTokenSequence, CharTokenizer, TextSequence
from .training import Checkpoint, LossWeights, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
