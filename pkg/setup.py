"""Config for setup package ddl-grounding."""

import os

from setuptools import setup


__version__ = '1.0.0'


def read_file(fname):
    """Read the given file.

    :param fname: Filename to be read
    :return:      File content
    """
    with open(os.path.join(os.path.dirname(__file__), fname)) as f:
        return f.read()


setup(
    name='ddl-grounding',
    version=__version__,
    description='Test-time verification of abnormality grounding with '
                'vision-language models',
    long_description=read_file('README.rst'),
    long_description_content_type='text/x-rst',
    packages=['ddl_grounding'],
    package_data={'ddl_grounding': ['templates/*.txt']},
    install_requires=read_file('requirements.txt').splitlines(),
    python_requires='>=3.7',
    license='Apache 2.0',
    keywords=['grounding', 'vision-language', 'medical-imaging',
              'prompt-optimization', 'test-time-augmentation'],
    classifiers=[
        'Programming Language :: Python :: 3.7',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
        'Topic :: Scientific/Engineering :: Image Recognition',
        ],
    entry_points={
        'console_scripts': [
            'ddl-grounding = ddl_grounding.cli:main',
        ]
    }
)
