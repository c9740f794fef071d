# Algorithms module
