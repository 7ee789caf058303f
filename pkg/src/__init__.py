# Budgeted perception lab: budget law, rollout env, policy, trainers, evaluation
