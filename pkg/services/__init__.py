# services: stages of the activity chain reconstruction pipeline.
