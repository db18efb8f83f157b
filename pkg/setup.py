#!/usr/bin/env python3
"""
Setup script for Disc Grade
"""

from setuptools import setup, find_packages
from pathlib import Path

# Read the README file
this_directory = Path(__file__).parent
long_description = (this_directory / "README.md").read_text()

# Read requirements
requirements = []
with open("requirements.txt") as f:
    requirements = [
        line.strip() for line in f if line.strip() and not line.startswith("#")
    ]

setup(
    name="disc-grade",
    version="1.0.0",
    author="Disc Grade Team",
    description=(
        "Disc-level lumbar spinal stenosis grading from sagittal MRI "
        "with contrastive pretraining"
    ),
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(
        include=[
            "config*",
            "data*",
            "processing*",
            "models*",
            "training*",
            "evaluation*",
            "utils*",
        ]
    ),
    py_modules=["cli", "main"],
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Scientific/Engineering :: Medical Science Apps.",
    ],
    python_requires=">=3.9",
    install_requires=requirements,
    extras_require={
        "dev": [
            "pytest>=7.0.0",
            "pytest-cov>=4.0.0",
            "black>=22.0.0",
            "flake8>=5.0.0",
            "mypy>=1.0.0",
            "isort>=5.10.0",
        ],
    },
    entry_points={
        "console_scripts": [
            "disc-grade=cli:main",
        ],
    },
    zip_safe=False,
)
