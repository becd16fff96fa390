from setuptools import find_packages, setup

from clickchoice import __version__

with open("requirements.txt") as handle:
    requirements = [line.strip() for line in handle if line.strip() and not line.startswith("pytest")]

setup(
    name="clickchoice",
    version=__version__,
    description="Shape-restricted product-choice probability tables from clickstream data",
    packages=find_packages(exclude=["tests", "applications"]),
    install_requires=requirements,
    python_requires=">=3.8",
    entry_points={"console_scripts": ["clickchoice=clickchoice.cli:main"]},
)
