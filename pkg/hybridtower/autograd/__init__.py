# Tensor engine, layers and optimizer
