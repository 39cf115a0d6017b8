# Encoders, token selection, generator and fusioner
