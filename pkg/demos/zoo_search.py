"""Browse the built-in model zoo: modality filter first, then cosine ranking.

    python demos/zoo_search.py
"""

from tablefuse.llm.gateway import FixtureStore, Gateway, GatewayConfig
from tablefuse.table import Modality
from tablefuse.zoo import builtin_zoo

REQUESTS = [
    (Modality.TEXT, "small model that runs on a phone CPU"),
    (Modality.TEXT, "highest accuracy, large pretrained encoder"),
    (Modality.IMAGE_PATH, "lightweight mobile image backbone"),
    (Modality.IMAGE_PATH, "image and text aligned embeddings"),
]


def main() -> None:
    # replay mode with an empty store: embeddings are local, chat is never called
    gateway = Gateway(GatewayConfig(mode="replay"), FixtureStore())
    zoo = builtin_zoo(gateway)
    print(f"{len(zoo)} cards, embedder {gateway.embedder_name}")
    for modality, request in REQUESTS:
        sims = zoo.similarities(request)
        print(f"\n[{modality.value}] {request!r}")
        for rank, card in enumerate(zoo.retrieve_candidates(modality, request, k=5), 1):
            print(f"  {rank}. {card.name:<28} {sims[card.name]:+.4f}  dim={card.output_feature_dim}")


if __name__ == "__main__":
    main()
