import os

LEAKY_ALPHA = float(os.getenv("IMABENCH_LEAKY_ALPHA", "0.1"))
BIAS_SCALE = float(os.getenv("IMABENCH_BIAS_SCALE", "1.0"))

FLOW_BLOCKS = int(os.getenv("IMABENCH_FLOW_BLOCKS", "10"))
HIDDEN_WIDTH = int(os.getenv("IMABENCH_HIDDEN_WIDTH", "64"))
HIDDEN_LAYERS = int(os.getenv("IMABENCH_HIDDEN_LAYERS", "2"))
LIPSCHITZ_COEFF = float(os.getenv("IMABENCH_LIPSCHITZ_COEFF", "0.9"))
BLOCK_ALPHA = float(os.getenv("IMABENCH_BLOCK_ALPHA", "0.3"))
POWER_ITERS = int(os.getenv("IMABENCH_POWER_ITERS", "5"))
OUTPUT_INIT_SCALE = float(os.getenv("IMABENCH_OUTPUT_INIT_SCALE", "1e-2"))

EVAL_SAMPLES = int(os.getenv("IMABENCH_EVAL_SAMPLES", "10000"))
EVAL_BATCH = int(os.getenv("IMABENCH_EVAL_BATCH", "2048"))
DARMOIS_NODES = int(os.getenv("IMABENCH_DARMOIS_NODES", "2048"))

# |det| thresholds
SINGULAR_DET = 1e-12
MIXING_MIN_DET = 1e-8

OUTPUT_DIR = os.getenv("IMABENCH_OUTPUT_DIR", "runs").strip()
LOG_LEVEL = os.getenv("IMABENCH_LOG_LEVEL", "INFO").upper()
CODE_VERSION = os.getenv("IMABENCH_CODE_VERSION", "imabench-1.0.0")
