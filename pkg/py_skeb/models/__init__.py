"""This is the pipeline subpackage of PySKeB."""
