# Offline index and online query path
