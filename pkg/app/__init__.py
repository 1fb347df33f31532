# Social learning diffusion + choice estimation service
