# Objectives, checkpoints and training loops
