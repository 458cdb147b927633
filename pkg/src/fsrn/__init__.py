"""Few-shot detection toolkit: episodic multi-way training, prototype
feature fusion, meta-test adaptation and transferability evaluation on a
synthetic shapes benchmark."""

__version__ = "0.1.0"
