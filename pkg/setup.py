from setuptools import setup, find_packages

setup(
    name="blowup_modules",
    version="0.1",
    packages=find_packages(exclude=["tests", "examples*"]),
    py_modules=["run"],
    install_requires=[
        "numpy",
        "scipy>=1.12",
        "sqlalchemy",
        "python-dotenv",
        "pydantic>=2",
        "alembic",
    ],
)
