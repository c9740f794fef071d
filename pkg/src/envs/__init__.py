# Environments module
