# Noyau numérique: tenseurs, couches, architectures, pertes, optimiseurs
