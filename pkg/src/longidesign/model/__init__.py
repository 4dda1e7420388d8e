from .design_report import DesignReport
