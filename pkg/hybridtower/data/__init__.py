# Synthetic paired data
