"""Parameter counts of every full-size variant and MACs at 224x224."""

from vgamba.analysis import count_macs
from vgamba.backbone import build_backbone, count_parameters, get_spec

for v in ("vgamba-b", "vgamba-l", "vgamba-x", "resnet-50", "botnet-50"):
    model = build_backbone(get_spec(v))
    macs = count_macs(model, (1, 3, 224, 224)).macs
    print(f"{v:10s} params {count_parameters(model) / 1e6:7.3f}M  MACs {macs / 1e9:6.3f}G  (2xMAC {2 * macs / 1e9:6.3f}G)")
