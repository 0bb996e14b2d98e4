"""Store the components (modules) of PySKeB."""
