"""Relative smoothness certificate for one-point logistic regression on a grid of boxes."""

import numpy as np

from ngvi.diagnostics import certify_relative_smoothness, moduli, sufficient_constants
from ngvi.geometry import DomainBox
from ngvi.models import Dataset, LikelihoodModel


def main():
    model = LikelihoodModel("logistic", Dataset(np.array([[1.0]]), np.array([1.0])))
    print(f"{'U':>4} {'D':>5} {'beta (loglik)':>14} {'sufficient':>11} {'iff agree':>10} {'mu_C':>9}")
    for U in (1.0, 2.0, 4.0):
        for D in (2.0, 4.0, 25.0):
            box = DomainBox(U, D)
            cert = certify_relative_smoothness(model, box, part="loglik")
            suff = sufficient_constants("logistic", model.data, box).beta
            print(f"{U:4.0f} {D:5.0f} {cert.beta:14.5f} {suff:11.5f} {str(cert.iff_agreement):>10} "
                  f"{moduli(box).mu_C:9.5f}")


if __name__ == "__main__":
    main()
