"""Train MADDPG briefly, then corrupt two chargers' observations mid-episode.

Actors only read their own charger, so the healthy chargers keep acting
exactly as before; the centralized DQN baseline does not.
"""

from voltmesh import FaultSpec, MadqnConfig, TrainConfig, generate_synthetic, madqn_train, rollout, train

scenario = generate_synthetic(4, days=1, seed=5)
cfg = TrainConfig(episodes=40, batch_size=64, steps_per_update=4, warmup=500)
result = train(scenario, cfg, seed=0)
rewards = result.rewards()
print(f"MADDPG reward: first 10 episodes {rewards[:10].mean():.2f}, last 10 {rewards[-10:].mean():.2f}")

dqn = madqn_train(scenario, MadqnConfig(episodes=40), seed=0).policy
fault = FaultSpec(fault_step=30, faulty_chargers=(0, 2))
for name, policy in (("MADDPG", result.policy), ("MADQN", dqn)):
    rep = rollout(scenario, policy, fault=fault, seed=1).fault_report
    print(f"{name}: healthy chargers changed action on {rep['changed_steps']} of {rep['steps_compared']} steps")
