"""Model roles: exact oracles, the tiny denoiser and the block executor."""
