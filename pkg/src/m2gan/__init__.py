"""Multi-stage, multi-task recurrent GAN for single-image raindrop removal."""
from .blocks import ASPP, RDB, URDB, AsppConfig, ConvLSTMCell, RdbConfig, UrdbConfig
from .config import RunConfig, TrainConfig, load_config
from .discriminators import BatchPair, Discriminator, DiscriminatorConfig, relativistic_prob
from .generator import M2GANGenerator, PipelineConfig, StageGenerator, StageOutput
from .losses import LossWeights, PerceptualBackbone
from .maps import LabelMapSegmenter, ToySegmenter, attention_rain_map, init_priors
from .spectral import spectral_norm, spectral_normalize

__version__ = "0.1.0"
