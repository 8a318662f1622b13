#!/usr/bin/env python

from setuptools import setup, find_packages

if __name__ == '__main__':
    setup(name='recurvuln',
          packages=find_packages(where='src/main/python'),
          package_dir={'': 'src/main/python'},
          package_data={'recurvuln.prompts': ['*.md']},
          entry_points={'console_scripts': ['recurvuln = recurvuln.cli:main',
                                            'recurvuln-api = recurvuln.api:run_app']},
          install_requires=['fastapi>=0.95.0', 'uvicorn>=0.22.0', 'sqlalchemy>=2.0.0',
                            'python-dotenv>=1.0.0', 'pydantic>=2.0.0', 'requests>=2.28.2',
                            'tree-sitter>=0.22.0', 'tree-sitter-c>=0.21.0'],
          python_requires='>=3.11',
          zip_safe=False)
