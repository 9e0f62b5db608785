"""CT/PET head-and-neck tumour segmentation and recurrence-free-survival toolkit."""
__version__ = "0.1.0"
