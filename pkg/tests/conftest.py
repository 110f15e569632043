import hypothesis

# Deterministic property runs: derandomized, no deadline (grid sweeps are
# slow on shared CI boxes), explicit example counts kept modest.
hypothesis.settings.register_profile(
    "pdflow",
    deadline=None,
    derandomize=True,
    max_examples=25,
    print_blob=False,
)
hypothesis.settings.load_profile("pdflow")
