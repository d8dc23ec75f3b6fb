from setuptools import setup, find_packages

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

with open("requirements.txt", "r", encoding="utf-8") as f:
    install_requires = [line for line in f.read().split("\n") if line.strip()]

setup(
    name="needlegrasp",
    version="0.1.0",
    author="Ong Yong Xin",
    author_email="ongyongxin.offical@gmail.com",
    description="Simulated visual-servo grasping of a suturing needle.",
    long_description=long_description,
    long_description_content_type="text/markdown",
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Topic :: Scientific/Engineering",
    ],
    packages=find_packages(exclude=["*.tests", "*.tests.*", "tests.*", "tests"]),
    package_data={"needlegrasp": ["data/*.toml"]},
    python_requires=">=3.8",
    install_requires=install_requires,
    extras_require={"test": ["pytest>=6.0"]},
    entry_points={"console_scripts": ["needlegrasp = needlegrasp.cli:main"]},
)
