"""Low-rank scatter eigenpairs through the small Gram matrix, checked against LAPACK."""
import numpy as np

from fstta.linalg import center_rows, scatter_dense, scatter_eigen

rng = np.random.default_rng(0)
x = rng.normal(size=(5, 128))
_, xc = center_rows(x)

eig = scatter_eigen(xc, denom=4)
print("rank", eig.rank, "trace", round(eig.trace, 6))
print("Jacobi  ", np.round(eig.eigenvalues, 6))

ref = np.linalg.eigvalsh(scatter_dense(xc, 4))[::-1][: eig.rank]
print("LAPACK  ", np.round(ref, 6))
print("max |diff|", np.abs(ref - eig.eigenvalues).max())
