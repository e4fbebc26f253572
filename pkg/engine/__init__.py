"""Core algorithms: absorbing diffusion, exact oracle, block decoding."""
