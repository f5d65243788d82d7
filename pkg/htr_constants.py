# htr_constants.py
# Default hyperparameters and conventions. Tweak to match your data.

# image geometry
CANONICAL_HEIGHT = 64
BACKGROUND_LEVEL = 1.0   # white background; ink is dark
DOWNSAMPLE_FACTOR = 16   # horizontal stride of both backbones

# rendering
FONT_SIZE_RANGE = (40, 56)       # points, before scaling to canonical height
MARGIN_RANGE_PX = (2, 10)
MAX_FONT_RETRIES = 10

# charset / transcripts
END_TOKEN = "<end>"
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
MAX_TRANSCRIPT_LEN = 32
CHARSET_FORMAT_VERSION = 1

# recognizer
BACKBONE_SMALL_CHANNELS = (32, 64, 128, 256, 256)
ENCODER_LAYERS = 2
ENCODER_HIDDEN = 256
DECODER_LAYERS = 2
DECODER_HIDDEN = 256
EMBEDDING_DIM = 128
ATTENTION_DIM = 256
ATTENTION_CHANNELS = 16   # p
ATTENTION_KERNEL = 7      # r
DROPOUT = 0.5

# adversary
DISCRIMINATOR_WIDTHS = (512, 256)
POOLING_GRU_LAYERS = 2
PYRAMID_LEVELS = (1, 2, 4)
SOURCE_LABEL = 1.0
TARGET_LABEL = 0.0

# optimisation
LEARNING_RATE = 2e-4
BATCH_SIZE = 32
GRAD_CLIP_NORM = 5.0
EXP_LAMBDA_GAMMA = 10.0
WRITER_ADAPT_SOURCE_WORDS = 600

# persistence
CHECKPOINT_FORMAT_VERSION = 1
