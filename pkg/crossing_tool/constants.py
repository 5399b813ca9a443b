APP_NAME = "crossing"

# Observation protocol
OBS_LEN = 5
FRAME_RATE_HZ = 10.0
TTE_MIN_S = 1.0
TTE_MAX_S = 2.0
WINDOW_OVERLAP = 0.5
INTERP_FACTOR = 5

# Architecture
LSTM_HIDDEN = 256
VISUAL_EMBED = 512
PENULT_DENSE = 256
BASE_FILTERS = 32
WIDE_FILTERS = 64
ATROUS_RATES = (1, 2, 4)
ENCODER_DOWNSAMPLE = 8
MAP_STRATEGIES = ("sequential", "atrous", "multiscale")
INPUT_SIZE = (64, 64)
SCENE_CHANNELS = 3
BEV_CHANNELS = 3
SEMANTIC_CLASSES = 14
DRIVER_ACTIONS = ("stopped", "moving_slow", "moving_fast", "decelerating", "accelerating")

# Geometry and feature scaling
MAP_EXTENT_M = 30.0
CROP_SCALE = 1.5
SPEED_SCALE = 10.0

# Training recipe
BATCH_SIZE = 16
LEARNING_RATE = 5e-5
L2_COEFF = 1e-4
RMSPROP_DECAY = 0.9
RMSPROP_EPSILON = 1e-8
PROB_EPS = 1e-7
EPOCHS_2D = 50
EPOCHS_3D = 40
TRAIN_FRACTION = 0.7

# Metrics
THRESHOLD = 0.5
REPORT_KEYS = ("acc", "auc", "f1", "precision", "tp", "fp", "tn", "fn")

# File formats
DATASET_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
RAW_TENSOR_MAGIC = "RAWT1"

MAX_WORKERS = 4

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4
