# config/settings.py
import os
from dotenv import load_dotenv

load_dotenv()


class Config:
    # Runtime (global flags fall back to these; HF_* environment overrides)
    SEED = int(os.getenv('HF_SEED', '0'))
    OUTPUT_DIR = os.getenv('HF_OUT', 'runs')
    THREADS = int(os.getenv('HF_THREADS', '1'))
    LOG_LEVEL = os.getenv('HF_LOG_LEVEL', 'INFO')
    LOG_EVERY_EPISODES = 20

    # Simulation
    SAMPLE_TIME = 0.005             # hours per control interval (CSTR)
    RK4_SUBSTEPS = 4

    # CSTR constraint boxes: c_A, c_B [mol/l], T_R, T_K [degC]
    CSTR_STATE_LOWER = [0.1, 0.1, 50.0, 50.0]
    CSTR_STATE_UPPER = [2.0, 2.0, 140.0, 140.0]
    # F [1/h], Qdot [kJ/h]
    CSTR_ACTION_LOWER = [5.0, -8500.0]
    CSTR_ACTION_UPPER = [100.0, 0.0]
    CSTR_GOAL_LOWER = 0.1
    CSTR_GOAL_UPPER = 2.0

    # Uncertainty ranges and grids
    ALPHA_RANGE = (0.95, 1.05)
    BETA_RANGE = (0.9, 1.1)
    TRAINING_GRID_SIZE = 10

    # Rewards and metrics
    TRAIN_REWARD_VARIANCE = 0.0001
    METRIC_VARIANCE = 0.01
    SPARSE_THRESHOLD = 0.01
    EPISODE_LENGTH = 50
    COMPARE_LENGTH = 100

    # Actor-critic training
    TOTAL_STEPS = 100000
    BATCH_SIZE = 256
    BUFFER_CAPACITY = 1000000
    WARMUP_STEPS = 1000
    TARGET_MODE = 'sampled'         # 'sampled' or 'full-branch'
    HER_ENABLED = True
    HIDDEN_SIZES = [64, 64]
    GAMMA = 0.98
    TAU = 0.005
    ACTOR_LR = 0.001
    CRITIC_LR = 0.001
    NOISE_FRACTION = 0.1            # exploration std as a fraction of action range
    UPDATES_PER_STEP = 1

    # RL evaluation
    EVAL_STARTS = 200
    EVAL_HORIZON = 50
    EVAL_TAIL = 25

    # LQR
    DARE_TOL = 1e-10
    DARE_MAX_ITERS = 100000

    # MPC
    MPC_HORIZON = 5                 # unified RL+MPC policy
    MPC_BASELINE_HORIZON = 20       # quadratic robust MPC
    MPC_REWARD_VARIANCE = 0.0625
    MPC_PENALTY_WEIGHT = 1.0
    MPC_BASELINE_PENALTY_WEIGHT = 100.0
    MPC_ITERATIONS = 300
    MPC_RESTARTS = 4
    MPC_STEP_SIZE = 0.05            # Adam step in normalized action units
    MPC_STEP_DECAY = 0.01           # final step = MPC_STEP_SIZE * MPC_STEP_DECAY

    # Comparison
    COMPARE_ROLLOUTS = 100
