"""Label-set operation networks on feature vectors."""
