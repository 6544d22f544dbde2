"""Multi-agent EV charging station simulation, learning and baselines."""

from .baselines import (MadqnConfig, MadqnPolicy, RhoConfig, RhoPolicy, UncontrolledPolicy, madqn_train,
                        rho_plan, uncontrolled_policy)
from .dispatch import AgentAction, ExogenousStep, PowerFlows, allocate, verify_flows
from .env import FaultSpec, RewardConfig, StationEnv, rollout
from .lp import LinearProgram, solve
from .maddpg import MaddpgPolicy, TrainConfig, train
from .scenario import Scenario, generate_synthetic, load_scenario, load_scenario_dir, save_scenario
from .station import ChargerSession, ChargerState, StationConfig

__version__ = "0.1.0"

__all__ = [
    "AgentAction", "ChargerSession", "ChargerState", "ExogenousStep", "FaultSpec", "LinearProgram",
    "MadqnConfig", "MadqnPolicy", "MaddpgPolicy", "PowerFlows", "RewardConfig", "RhoConfig", "RhoPolicy",
    "Scenario", "StationConfig", "StationEnv", "TrainConfig", "UncontrolledPolicy", "allocate",
    "generate_synthetic", "load_scenario", "load_scenario_dir", "madqn_train", "rho_plan", "rollout",
    "save_scenario", "solve", "train", "uncontrolled_policy", "verify_flows",
]
