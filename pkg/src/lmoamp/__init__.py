"""Long-memory OAMP solver, state evolution and experiment harness."""
