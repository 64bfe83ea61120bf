"""Models, prompt learners, distillation, and training loop."""
